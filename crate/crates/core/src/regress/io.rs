//! Model container: `GZKM`, `u32` version, `u32` metadata length, JSON
//! metadata, little-endian `f64` sections, then a CRC-32 of everything
//! before it.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GazeModel, KnnModel, Node, Regressor, RfModel, TrainingFingerprint, Tree};
use crate::error::{GazeError, Result};
use crate::features::Descriptor;
use crate::reduction::ReductionModel;

pub const MODEL_MAGIC: &[u8; 4] = b"GZKM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RegressorMeta {
    Knn { k: usize, dim: usize, samples: usize },
    Rf { dim: usize, tree_nodes: Vec<usize> },
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    descriptor: Descriptor,
    augmented: bool,
    fingerprint: TrainingFingerprint,
    class_count: usize,
    input_dim: usize,
    pca_dim: usize,
    regressor_x: RegressorMeta,
    regressor_y: RegressorMeta,
    sections: Vec<Section>,
}

const LEAF: f64 = -1.0;

fn regressor_sections(r: &Regressor, axis: &str, out: &mut Vec<(String, Vec<f64>)>) -> RegressorMeta {
    match r {
        Regressor::Knn(m) => {
            out.push((format!("knn_{axis}_x"), m.x.clone()));
            out.push((format!("knn_{axis}_y"), m.y.clone()));
            RegressorMeta::Knn { k: m.k, dim: m.dim, samples: m.len() }
        }
        Regressor::Rf(m) => {
            let mut nodes = Vec::new();
            for t in &m.trees {
                for n in &t.nodes {
                    match *n {
                        Node::Leaf { value } => nodes.extend([LEAF, value, 0.0, 0.0]),
                        Node::Split { feature, threshold, left, right } => nodes.extend([feature as f64, threshold, left as f64, right as f64]),
                    }
                }
            }
            out.push((format!("rf_{axis}_nodes"), nodes));
            RegressorMeta::Rf {
                dim: m.dim,
                tree_nodes: m.trees.iter().map(|t| t.nodes.len()).collect(),
            }
        }
    }
}

pub fn model_to_bytes(model: &GazeModel) -> Result<Vec<u8>> {
    let r = &model.reduction;
    let mut sections: Vec<(String, Vec<f64>)> = vec![
        ("pca_mean".into(), r.pca_mean.as_slice().to_vec()),
        ("pca_basis".into(), r.pca_basis.as_slice().to_vec()),
        ("lda_basis".into(), r.lda_basis.as_slice().to_vec()),
    ];
    let regressor_x = regressor_sections(&model.regressor_x, "x", &mut sections);
    let regressor_y = regressor_sections(&model.regressor_y, "y", &mut sections);
    let meta = Meta {
        descriptor: model.descriptor,
        augmented: model.augmented,
        fingerprint: model.fingerprint.clone(),
        class_count: r.class_count,
        input_dim: r.input_dim,
        pca_dim: r.pca_basis.ncols(),
        regressor_x,
        regressor_y,
        sections: sections.iter().map(|(name, v)| Section { name: name.clone(), len: v.len() }).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, values) in &sections {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Sections {
    data: Vec<(String, Vec<f64>)>,
    next: usize,
}

impl Sections {
    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let (n, v) = self
            .data
            .get_mut(self.next)
            .ok_or_else(|| GazeError::Format(format!("missing section {name}")))?;
        if n != name || v.len() != len {
            return Err(GazeError::Format(format!("expected section {name} of {len} values, found {n} of {}", v.len())));
        }
        self.next += 1;
        Ok(std::mem::take(v))
    }
}

fn index(v: f64, bound: usize, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < bound {
        Ok(v as usize)
    } else {
        Err(GazeError::Format(format!("{what} {v} out of range (< {bound})")))
    }
}

fn read_regressor(meta: &RegressorMeta, axis: &str, sections: &mut Sections) -> Result<Regressor> {
    match meta {
        RegressorMeta::Knn { k, dim, samples } => {
            let x = sections.take(&format!("knn_{axis}_x"), samples * dim)?;
            let y = sections.take(&format!("knn_{axis}_y"), *samples)?;
            if *k == 0 || k > samples {
                return Err(GazeError::Format(format!("k = {k} with {samples} samples")));
            }
            Ok(Regressor::Knn(KnnModel { k: *k, dim: *dim, x, y }))
        }
        RegressorMeta::Rf { dim, tree_nodes } => {
            let total: usize = tree_nodes.iter().sum();
            let flat = sections.take(&format!("rf_{axis}_nodes"), total * 4)?;
            if tree_nodes.is_empty() {
                return Err(GazeError::Format("forest without trees".into()));
            }
            let mut trees = Vec::with_capacity(tree_nodes.len());
            let mut quads = flat.chunks_exact(4);
            for &count in tree_nodes {
                let mut nodes = Vec::with_capacity(count);
                for i in 0..count {
                    let q = quads.next().expect("length checked");
                    nodes.push(if q[0] == LEAF {
                        Node::Leaf { value: q[1] }
                    } else {
                        let left = index(q[2], count, "child")?;
                        let right = index(q[3], count, "child")?;
                        if left <= i || right <= i {
                            return Err(GazeError::Format("tree child precedes its parent".into()));
                        }
                        Node::Split {
                            feature: index(q[0], *dim, "feature")?,
                            threshold: q[1],
                            left,
                            right,
                        }
                    });
                }
                if nodes.is_empty() {
                    return Err(GazeError::Format("empty tree".into()));
                }
                trees.push(Tree { nodes });
            }
            Ok(Regressor::Rf(RfModel { dim: *dim, trees }))
        }
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<GazeModel> {
    if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
        return Err(GazeError::Format("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version > MODEL_VERSION || version == 0 {
        return Err(GazeError::Version { found: version, supported: MODEL_VERSION });
    }
    if bytes.len() < 16 {
        return Err(GazeError::Checksum { stored: 0, computed: crc32fast::hash(bytes) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(GazeError::Checksum { stored, computed });
    }
    let meta_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let json = body.get(12..12 + meta_len).ok_or_else(|| GazeError::Format("metadata overruns file".into()))?;
    let meta: Meta = serde_json::from_slice(json)?;
    let mut data = &body[12 + meta_len..];
    let mut parsed = Vec::with_capacity(meta.sections.len());
    for s in &meta.sections {
        let bytes_needed = s.len.checked_mul(8).ok_or_else(|| GazeError::Format("section too large".into()))?;
        if data.len() < bytes_needed {
            return Err(GazeError::Format(format!("section {} overruns file", s.name)));
        }
        let (head, rest) = data.split_at(bytes_needed);
        parsed.push((s.name.clone(), head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()));
        data = rest;
    }
    if !data.is_empty() {
        return Err(GazeError::Format(format!("{} trailing bytes", data.len())));
    }
    let mut sections = Sections { data: parsed, next: 0 };
    if meta.class_count < 2 {
        return Err(GazeError::Format("class count below 2".into()));
    }
    let (d, p, out) = (meta.input_dim, meta.pca_dim, meta.class_count - 1);
    let mean = DVector::from_vec(sections.take("pca_mean", d)?);
    let pca = DMatrix::from_vec(d, p, sections.take("pca_basis", d * p)?);
    let lda = DMatrix::from_vec(p, out, sections.take("lda_basis", p * out)?);
    let reduction = ReductionModel::from_parts(mean, pca, lda, meta.class_count)?;
    let regressor_x = read_regressor(&meta.regressor_x, "x", &mut sections)?;
    let regressor_y = read_regressor(&meta.regressor_y, "y", &mut sections)?;
    let expected = out + if meta.augmented { crate::eyes::EyeGeometryFeature::LEN } else { 0 };
    for r in [&regressor_x, &regressor_y] {
        if r.dim() != expected {
            return Err(GazeError::Format(format!("regressor input {} does not match reduced dimension {expected}", r.dim())));
        }
    }
    Ok(GazeModel {
        descriptor: meta.descriptor,
        augmented: meta.augmented,
        reduction,
        regressor_x,
        regressor_y,
        fingerprint: meta.fingerprint,
    })
}

pub fn save_model(model: &GazeModel, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| GazeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| GazeError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<GazeModel> {
    let bytes = fs::read(path).map_err(|e| GazeError::io(path, e))?;
    model_from_bytes(&bytes)
}
