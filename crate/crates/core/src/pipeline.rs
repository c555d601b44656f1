//! Turns a corpus into per-frame training samples: localization, cropping,
//! blink removal and descriptor extraction, with an optional on-disk cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{grid_to_screen, Corpus, GazePoint, SampleRecord, ScreenGeometry};
use crate::error::{GazeError, Result};
use crate::eyes::{detect_blinks, eye_geometry_feature, extract_pair, EyeGeometryFeature, EyePair};
use crate::features::{extract, Descriptor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    Blink,
    NoEyes,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub record: usize,
    pub reason: ExclusionReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// Index into the corpus records.
    pub record: usize,
    pub label: usize,
    pub truth: GazePoint,
    /// Descriptor values, rounded through `f32`.
    pub features: Vec<f64>,
    pub geometry: EyeGeometryFeature,
}

/// Usable samples of one corpus under one descriptor.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub descriptor: Descriptor,
    pub corpus_fingerprint: String,
    pub geometry: ScreenGeometry,
    pub records: Arc<Vec<SampleRecord>>,
    pub samples: Vec<PreparedSample>,
    pub excluded: Vec<Exclusion>,
}

impl PreparedSet {
    pub fn record(&self, sample: &PreparedSample) -> &SampleRecord {
        &self.records[sample.record]
    }

    pub fn subject_of(&self, sample: &PreparedSample) -> &str {
        &self.records[sample.record].subject_id
    }

    /// Subjects with at least one usable sample, in corpus order.
    pub fn subjects(&self) -> Vec<String> {
        let usable: BTreeSet<&str> = self.samples.iter().map(|s| self.subject_of(s)).collect();
        let mut out: Vec<String> = Vec::new();
        for r in self.records.iter() {
            if usable.contains(r.subject_id.as_str()) && !out.contains(&r.subject_id) {
                out.push(r.subject_id.clone());
            }
        }
        out
    }

    /// Subjects whose every frame was excluded.
    pub fn excluded_subjects(&self) -> Vec<String> {
        let usable = self.subjects();
        let mut out: Vec<String> = Vec::new();
        for r in self.records.iter() {
            if !usable.contains(&r.subject_id) && !out.contains(&r.subject_id) {
                out.push(r.subject_id.clone());
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(self.descriptor.len(), |s| s.features.len())
    }

    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.excluded.iter().filter(|e| e.reason == reason).count()
    }
}

/// Mirrors the precision of the on-disk feature cache, so cached and freshly
/// extracted features train identical models.
pub fn round_f32(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v as f32 as f64).collect()
}

/// Localizes and crops every frame, then drops blink frames per session.
/// Returns the kept pairs (by record index) and the exclusions.
pub fn crop_corpus(corpus: &Corpus) -> Result<(BTreeMap<usize, EyePair>, Vec<Exclusion>)> {
    let crops: Vec<Result<Option<EyePair>>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let (frame, candidates) = corpus.load(i)?;
            match extract_pair(&frame, &candidates) {
                Ok(pair) => Ok(Some(pair)),
                Err(GazeError::DetectionFailure { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut pairs = BTreeMap::new();
    let mut excluded = Vec::new();
    for (i, c) in crops.into_iter().enumerate() {
        match c? {
            Some(p) => {
                pairs.insert(i, p);
            }
            None => excluded.push(Exclusion {
                record: i,
                reason: ExclusionReason::NoEyes,
            }),
        }
    }

    let mut sessions: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (&i, _) in pairs.iter() {
        let r = &corpus.records[i];
        sessions.entry((&r.subject_id, &r.session_id)).or_default().push(i);
    }
    let mut blinked = Vec::new();
    for ((subject, session), mut idx) in sessions {
        idx.sort_by(|&a, &b| corpus.records[a].timestamp_s.total_cmp(&corpus.records[b].timestamp_s).then(a.cmp(&b)));
        let series: Vec<f64> = idx.iter().map(|i| pairs[i].mean_intensity()).collect();
        let report = detect_blinks(&series);
        if let Some(w) = &report.warning {
            log::warn!("{subject}/{session}: blink detection skipped: {w}");
        }
        blinked.extend(report.skipped().into_iter().map(|k| idx[k]));
    }
    for i in blinked {
        pairs.remove(&i);
        excluded.push(Exclusion {
            record: i,
            reason: ExclusionReason::Blink,
        });
    }
    excluded.sort_by_key(|e| e.record);
    Ok((pairs, excluded))
}

fn build_set(corpus: &Corpus, records: &Arc<Vec<SampleRecord>>, pairs: &BTreeMap<usize, EyePair>, excluded: &[Exclusion], descriptor: Descriptor) -> Result<PreparedSet> {
    let geometry = corpus.geometry;
    let entries: Vec<(&usize, &EyePair)> = pairs.iter().collect();
    let samples = entries
        .par_iter()
        .map(|(&i, pair)| {
            let r = &records[i];
            Ok(PreparedSample {
                record: i,
                label: geometry.label(r.grid),
                truth: grid_to_screen(r.grid, &geometry)?,
                features: round_f32(&extract(pair, descriptor).values),
                geometry: eye_geometry_feature(&pair.left_box, &pair.right_box),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PreparedSet {
        descriptor,
        corpus_fingerprint: corpus.fingerprint(),
        geometry,
        records: Arc::clone(records),
        samples,
        excluded: excluded.to_vec(),
    };
    for s in set.excluded_subjects() {
        log::warn!("subject {s}: no usable frames; excluded");
    }
    Ok(set)
}

/// Prepared samples for each requested descriptor; cropping runs once.
pub fn prepare_many(corpus: &Corpus, descriptors: &[Descriptor]) -> Result<Vec<PreparedSet>> {
    prepare_cached(corpus, descriptors, None)
}

pub fn prepare(corpus: &Corpus, descriptor: Descriptor) -> Result<PreparedSet> {
    Ok(prepare_many(corpus, &[descriptor])?.remove(0))
}

pub fn cache_path(dir: &Path, corpus_fingerprint: &str, descriptor: Descriptor) -> PathBuf {
    dir.join(format!("{corpus_fingerprint}-{descriptor}.gzkfeat"))
}

/// Like [`prepare_many`], reading and filling `cache_dir` when given.
pub fn prepare_cached(corpus: &Corpus, descriptors: &[Descriptor], cache_dir: Option<&Path>) -> Result<Vec<PreparedSet>> {
    let fingerprint = corpus.fingerprint();
    let records = Arc::new(corpus.records.clone());
    let mut out: Vec<Option<PreparedSet>> = vec![None; descriptors.len()];
    if let Some(dir) = cache_dir {
        for (slot, &d) in out.iter_mut().zip(descriptors) {
            let path = cache_path(dir, &fingerprint, d);
            if path.exists() {
                match read_features(&path, corpus) {
                    Ok(set) if set.descriptor == d => *slot = Some(set),
                    Ok(_) => log::warn!("{}: descriptor mismatch; recomputing", path.display()),
                    Err(e) => log::warn!("{}: unusable cache entry ({e}); recomputing", path.display()),
                }
            }
        }
    }
    if out.iter().any(Option::is_none) {
        let (pairs, excluded) = crop_corpus(corpus)?;
        for (slot, &d) in out.iter_mut().zip(descriptors) {
            if slot.is_none() {
                let set = build_set(corpus, &records, &pairs, &excluded, d)?;
                if let Some(dir) = cache_dir {
                    fs::create_dir_all(dir).map_err(|e| GazeError::io(dir, e))?;
                    write_features(&set, &cache_path(dir, &fingerprint, d))?;
                }
                *slot = Some(set);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every slot filled")).collect())
}

pub const FEATURE_MAGIC: &[u8; 8] = b"GZKFEAT1";

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    descriptor: Descriptor,
    corpus_fingerprint: String,
    dim: usize,
    records: Vec<usize>,
    excluded: Vec<Exclusion>,
}

/// Feature dump: magic, `u32` header length, JSON header, then one row of
/// `dim` descriptor values plus 10 geometry values per sample as `f32` LE.
pub fn write_features(set: &PreparedSet, path: &Path) -> Result<()> {
    let header = FeatureHeader {
        descriptor: set.descriptor,
        corpus_fingerprint: set.corpus_fingerprint.clone(),
        dim: set.dim(),
        records: set.samples.iter().map(|s| s.record).collect(),
        excluded: set.excluded.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + set.samples.len() * (header.dim + 10) * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in &set.samples {
        for &v in s.features.iter().chain(s.geometry.as_slice()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| GazeError::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| GazeError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| GazeError::io(path, e))
}

/// Reads a dump written for `corpus`; the fingerprints must agree.
pub fn read_features(path: &Path, corpus: &Corpus) -> Result<PreparedSet> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| GazeError::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != FEATURE_MAGIC {
        return Err(GazeError::Format(format!("{}: not a feature dump", path.display())));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| GazeError::Format("truncated feature header".into()))?;
    let header: FeatureHeader = serde_json::from_slice(body)?;
    let fingerprint = corpus.fingerprint();
    if header.corpus_fingerprint != fingerprint {
        return Err(GazeError::Fingerprint(format!(
            "feature dump was built from corpus {} but this corpus is {fingerprint}",
            header.corpus_fingerprint
        )));
    }
    let row = header.dim + EyeGeometryFeature::LEN;
    let data = &bytes[12 + hlen..];
    if data.len() != header.records.len() * row * 4 {
        return Err(GazeError::Format(format!(
            "feature dump holds {} bytes of data, expected {}",
            data.len(),
            header.records.len() * row * 4
        )));
    }
    let values: Vec<f64> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let geometry = corpus.geometry;
    let mut samples = Vec::with_capacity(header.records.len());
    for (k, &i) in header.records.iter().enumerate() {
        let r = corpus.records.get(i).ok_or_else(|| GazeError::Format(format!("record {i} out of range")))?;
        let v = &values[k * row..(k + 1) * row];
        let mut g = [0.0; EyeGeometryFeature::LEN];
        g.copy_from_slice(&v[header.dim..]);
        samples.push(PreparedSample {
            record: i,
            label: geometry.label(r.grid),
            truth: grid_to_screen(r.grid, &geometry)?,
            features: v[..header.dim].to_vec(),
            geometry: EyeGeometryFeature(g),
        });
    }
    Ok(PreparedSet {
        descriptor: header.descriptor,
        corpus_fingerprint: fingerprint,
        geometry,
        records: Arc::new(corpus.records.clone()),
        samples,
        excluded: header.excluded,
    })
}
