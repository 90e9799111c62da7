//! On-disk model bundles and evaluation sets.
//!
//! A bundle is a directory holding `manifest.json` plus one raw blob per
//! parameter tensor (little-endian f32, row-major). Every blob is listed in
//! its layer's `checksums` map as a 16-digit hex FNV-1a 64 digest.
//!
//! ```json
//! {
//!   "format_version": "adfp-bundle/1",
//!   "num_classes": 10,
//!   "input": {"c": 1, "h": 8, "w": 8},
//!   "layers": [
//!     {"kind": "conv", "name": "conv1", "dims": [16, 1, 3, 3], "stride": 1, "padding": 1,
//!      "activation": "relu", "blobs": {"weight": "conv1.weight.bin"},
//!      "bn": {"gamma": "conv1.bn.gamma.bin", "beta": "...", "mean": "...", "var": "...", "eps": 1e-5},
//!      "checksums": {"conv1.weight.bin": "…", "conv1.bn.gamma.bin": "…"}},
//!     {"kind": "global_avg_pool", "name": "gap"},
//!     {"kind": "flatten", "name": "flatten"},
//!     {"kind": "linear", "name": "fc", "dims": [10, 64], "activation": "none",
//!      "blobs": {"weight": "fc.weight.bin", "bias": "fc.bias.bin"}, "checksums": {"…": "…"}}
//!   ]
//! }
//! ```
//!
//! An evaluation set is a directory with `eval.json`, `images.bin`
//! (f32 `n x c x h x w`, already normalized) and `labels.bin` (u16 per image).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, BnParams, ConvLayer, ConvWeights, InputShape, Layer, LayerNode, LinearLayer, LinearWeights, ModelGraph,
};
use crate::tensor::Tensor4;

pub const BUNDLE_VERSION: &str = "adfp-bundle/1";
pub const EVALSET_VERSION: &str = "adfp-evalset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_MANIFEST_FILE: &str = "eval.json";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    num_classes: usize,
    input: InputShape,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dilation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    blobs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BnEntry {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    eps: f64,
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

struct BlobReader<'a> {
    dir: &'a Path,
    layer: &'a LayerEntry,
}

impl BlobReader<'_> {
    fn read(&self, file: &str, tensor: &str, len: usize) -> Result<Vec<f32>> {
        let expected =
            self.layer.checksums.get(file).ok_or_else(|| {
                Error::Manifest(format!("layer `{}` has no checksum for blob `{file}`", self.layer.name))
            })?;
        let path = self.dir.join(file);
        if !path.is_file() {
            return Err(Error::DanglingBlob(file.to_string()));
        }
        let bytes = read_file(&path)?;
        let found = checksum_hex(&bytes);
        if !found.eq_ignore_ascii_case(expected) {
            return Err(Error::Checksum {
                blob: file.to_string(),
                expected: expected.clone(),
                found,
            });
        }
        if bytes.len() != 4 * len {
            return Err(Error::BlobLength {
                tensor: tensor.to_string(),
                blob: file.to_string(),
                expected: 4 * len,
                found: bytes.len(),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn named(&self, key: &str, len: usize) -> Result<Vec<f32>> {
        let file =
            self.layer.blobs.get(key).ok_or_else(|| {
                Error::Manifest(format!("layer `{}` is missing blob reference `{key}`", self.layer.name))
            })?;
        self.read(file, &format!("{}.{key}", self.layer.name), len)
    }

    fn optional(&self, key: &str, len: usize) -> Result<Option<Vec<f32>>> {
        if self.layer.blobs.contains_key(key) {
            self.named(key, len).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn parse_layer(dir: &Path, entry: &LayerEntry) -> Result<LayerNode> {
    let dims = || {
        entry
            .dims
            .clone()
            .ok_or_else(|| Error::Manifest(format!("layer `{}` has no dims", entry.name)))
    };
    let reader = BlobReader { dir, layer: entry };
    match entry.kind.as_str() {
        "conv" => {
            let groups = entry.groups.unwrap_or(1);
            if groups != 1 {
                return Err(Error::UnsupportedLayer(format!(
                    "grouped conv (groups = {groups}) in layer `{}`",
                    entry.name
                )));
            }
            if entry.dilation.unwrap_or(1) != 1 {
                return Err(Error::UnsupportedLayer(format!(
                    "dilated conv in layer `{}`",
                    entry.name
                )));
            }
            let d = dims()?;
            let &[out, inp, kh, kw] = d.as_slice() else {
                return Err(Error::Manifest(format!(
                    "conv `{}` dims must have 4 entries",
                    entry.name
                )));
            };
            if kh != kw {
                return Err(Error::UnsupportedLayer(format!(
                    "non-square kernel {kh}x{kw} in layer `{}`",
                    entry.name
                )));
            }
            let data = reader.named("weight", out * inp * kh * kw)?;
            let weights = ConvWeights::new(
                out,
                inp,
                kh,
                entry.stride.unwrap_or(1),
                entry.padding.unwrap_or(0),
                data,
            )?;
            let bn = match &entry.bn {
                Some(b) => Some(BnParams::new(
                    reader.read(&b.gamma, &format!("{}.bn.gamma", entry.name), out)?,
                    reader.read(&b.beta, &format!("{}.bn.beta", entry.name), out)?,
                    reader.read(&b.mean, &format!("{}.bn.mean", entry.name), out)?,
                    reader.read(&b.var, &format!("{}.bn.var", entry.name), out)?,
                    b.eps,
                )?),
                None => None,
            };
            Ok(LayerNode::Conv(ConvLayer {
                weights,
                bn,
                activation: entry.activation.unwrap_or_default(),
            }))
        }
        "linear" => {
            let d = dims()?;
            let &[out, inp] = d.as_slice() else {
                return Err(Error::Manifest(format!(
                    "linear `{}` dims must have 2 entries",
                    entry.name
                )));
            };
            if entry.bn.is_some() {
                return Err(Error::UnsupportedLayer(format!(
                    "batch-norm after linear layer `{}`",
                    entry.name
                )));
            }
            let weight = reader.named("weight", out * inp)?;
            let bias = reader.optional("bias", out)?;
            Ok(LayerNode::Linear(LinearLayer {
                weights: LinearWeights::new(out, inp, weight, bias)?,
                activation: entry.activation.unwrap_or_default(),
            }))
        }
        "global_avg_pool" => Ok(LayerNode::GlobalAvgPool),
        "flatten" => Ok(LayerNode::Flatten),
        "residual_begin" => Ok(LayerNode::ResidualBegin),
        "residual_end" => Ok(LayerNode::ResidualEnd),
        other => Err(Error::UnsupportedLayer(format!(
            "kind `{other}` in layer `{}`",
            entry.name
        ))),
    }
}

/// Loads and validates a model bundle directory.
pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: BUNDLE_VERSION.into(),
        });
    }
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            parse_layer(dir, entry)
                .map(|node| Layer::new(entry.name.clone(), node))
                .map_err(|e| match e {
                    e @ (Error::UnsupportedLayer(_)
                    | Error::DanglingBlob(_)
                    | Error::Checksum { .. }
                    | Error::BlobLength { .. }) => e,
                    e => e.at_layer(i, &entry.name),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(manifest.input, layers, manifest.num_classes)
}

/// Writes `graph` as a bundle into `dir` (created if missing).
pub fn save_model(graph: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(graph.layers().len());
    for layer in graph.layers() {
        let mut entry = LayerEntry {
            kind: layer.node.kind().to_string(),
            name: layer.name.clone(),
            dims: None,
            stride: None,
            padding: None,
            groups: None,
            dilation: None,
            activation: None,
            blobs: BTreeMap::new(),
            bn: None,
            checksums: BTreeMap::new(),
        };
        let put = |key: &str, values: &[f32], entry: &mut LayerEntry| -> Result<String> {
            let file = format!("{}.{key}.bin", layer.name);
            let bytes = f32_bytes(values);
            write_file(&dir.join(&file), &bytes)?;
            entry.checksums.insert(file.clone(), checksum_hex(&bytes));
            Ok(file)
        };
        match &layer.node {
            LayerNode::Conv(conv) => {
                let w = &conv.weights;
                entry.dims = Some(w.dims().to_vec());
                entry.stride = Some(w.stride());
                entry.padding = Some(w.padding());
                entry.activation = Some(conv.activation);
                let file = put("weight", w.data(), &mut entry)?;
                entry.blobs.insert("weight".into(), file);
                if let Some(bn) = &conv.bn {
                    entry.bn = Some(BnEntry {
                        gamma: put("bn.gamma", &bn.gamma, &mut entry)?,
                        beta: put("bn.beta", &bn.beta, &mut entry)?,
                        mean: put("bn.mean", &bn.mean, &mut entry)?,
                        var: put("bn.var", &bn.var, &mut entry)?,
                        eps: bn.eps,
                    });
                }
            }
            LayerNode::Linear(lin) => {
                let w = &lin.weights;
                entry.dims = Some(vec![w.out_features(), w.in_features()]);
                entry.activation = Some(lin.activation);
                let file = put("weight", w.data(), &mut entry)?;
                entry.blobs.insert("weight".into(), file);
                if let Some(bias) = w.bias() {
                    let file = put("bias", bias, &mut entry)?;
                    entry.blobs.insert("bias".into(), file);
                }
            }
            _ => {}
        }
        entries.push(entry);
    }
    let manifest = Manifest {
        format_version: BUNDLE_VERSION.into(),
        num_classes: graph.num_classes(),
        input: graph.input(),
        layers: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct BlobRef {
    pub(crate) blob: String,
    pub(crate) checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalManifest {
    format_version: String,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    #[serde(default)]
    normalization: Normalization,
    images: BlobRef,
    labels: BlobRef,
}

/// Pre-normalized labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl EvalSet {
    pub fn new(images: Tensor4, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.n() == 0 {
            return Err(Error::Shape("evaluation set is empty".into()));
        }
        if labels.len() != images.n() {
            return Err(Error::Shape(format!(
                "{} labels for {} images",
                labels.len(),
                images.n()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            normalization: Normalization::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        })
    }

    /// Checks that the images fit the model's input and classes.
    pub fn check_model(&self, graph: &ModelGraph) -> Result<()> {
        let input = graph.input();
        let [_, c, h, w] = self.images.dims();
        if (c, h, w) != (input.c, input.h, input.w) {
            return Err(Error::Shape(format!(
                "evaluation images are {c}x{h}x{w}, model expects {}x{}x{}",
                input.c, input.h, input.w
            )));
        }
        if self.num_classes != graph.num_classes() {
            return Err(Error::Shape(format!(
                "evaluation set has {} classes, model has {}",
                self.num_classes,
                graph.num_classes()
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_checked(dir: &Path, blob: &BlobRef) -> Result<Vec<u8>> {
    let path = dir.join(&blob.blob);
    if !path.is_file() {
        return Err(Error::DanglingBlob(blob.blob.clone()));
    }
    let bytes = read_file(&path)?;
    let found = checksum_hex(&bytes);
    if !found.eq_ignore_ascii_case(&blob.checksum) {
        return Err(Error::Checksum {
            blob: blob.blob.clone(),
            expected: blob.checksum.clone(),
            found,
        });
    }
    Ok(bytes)
}

pub fn load_evalset(dir: impl AsRef<Path>) -> Result<EvalSet> {
    let dir = dir.as_ref();
    let path = dir.join(EVAL_MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: EvalManifest = serde_json::from_str(&text)?;
    if m.format_version != EVALSET_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: EVALSET_VERSION.into(),
        });
    }
    let count = m.n * m.c * m.h * m.w;
    let bytes = read_checked(dir, &m.images)?;
    if bytes.len() != 4 * count {
        return Err(Error::BlobLength {
            tensor: "images".into(),
            blob: m.images.blob,
            expected: 4 * count,
            found: bytes.len(),
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let bytes = read_checked(dir, &m.labels)?;
    if bytes.len() != 2 * m.n {
        return Err(Error::BlobLength {
            tensor: "labels".into(),
            blob: m.labels.blob,
            expected: 2 * m.n,
            found: bytes.len(),
        });
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    let mut set = EvalSet::new(Tensor4::new([m.n, m.c, m.h, m.w], pixels)?, labels, m.num_classes)?;
    set.normalization = m.normalization;
    Ok(set)
}

pub fn save_evalset(set: &EvalSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images = f32_bytes(set.images.data());
    let labels: Vec<u8> = set
        .labels
        .iter()
        .flat_map(|&l| u16::try_from(l).expect("labels fit in u16").to_le_bytes())
        .collect();
    write_file(&dir.join("images.bin"), &images)?;
    write_file(&dir.join("labels.bin"), &labels)?;
    let [n, c, h, w] = set.images.dims();
    let manifest = EvalManifest {
        format_version: EVALSET_VERSION.into(),
        n,
        c,
        h,
        w,
        num_classes: set.num_classes,
        normalization: set.normalization.clone(),
        images: BlobRef {
            blob: "images.bin".into(),
            checksum: checksum_hex(&images),
        },
        labels: BlobRef {
            blob: "labels.bin".into(),
            checksum: checksum_hex(&labels),
        },
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&dir.join(EVAL_MANIFEST_FILE), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(checksum_hex(b"foobar"), "85944171f73967e8");
    }
}
