//! Labeled corpora, screen geometry and frame pruning.

mod manifest;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GazeError, Result};
use crate::eyes::BoundingBox;
use crate::imaging::{self, GrayImage};

pub use manifest::{load_annotations, load_manifest, load_manifest_with, write_corpus, MANIFEST_HEADER};
pub use synth::{synth_generate, SubjectProfile, SynthConfig, SynthCorpus, SynthSequence};

/// Physical layout of the screen and its calibration grid (landscape, cm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub width_cm: f64,
    pub height_cm: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dx_cm: f64,
    pub dy_cm: f64,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        Self {
            width_cm: 22.62,
            height_cm: 14.14,
            grid_rows: 5,
            grid_cols: 7,
            dx_cm: 3.42,
            dy_cm: 3.41,
        }
    }
}

impl ScreenGeometry {
    pub fn validate(&self) -> Result<()> {
        let reals = [self.width_cm, self.height_cm, self.dx_cm, self.dy_cm];
        if reals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(GazeError::domain("screen geometry fields must be strictly positive"));
        }
        // the grid spans (n - 1) spacings between its outermost points
        if (self.grid_rows - 1) as f64 * self.dy_cm > self.height_cm || (self.grid_cols - 1) as f64 * self.dx_cm > self.width_cm {
            return Err(GazeError::domain("grid does not fit on the screen"));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn margin_x(&self) -> f64 {
        (self.width_cm - (self.grid_cols - 1) as f64 * self.dx_cm) / 2.0
    }

    pub fn margin_y(&self) -> f64 {
        (self.height_cm - (self.grid_rows - 1) as f64 * self.dy_cm) / 2.0
    }

    pub fn center(&self) -> GazePoint {
        GazePoint::new(self.width_cm / 2.0, self.height_cm / 2.0)
    }

    /// All grid indices in label order.
    pub fn grid(&self) -> impl Iterator<Item = GridIndex> + '_ {
        (0..self.grid_rows).flat_map(move |row| (0..self.grid_cols).map(move |col| GridIndex { row, col }))
    }

    pub fn grid_index(&self, row: usize, col: usize) -> Result<GridIndex> {
        if row >= self.grid_rows || col >= self.grid_cols {
            return Err(GazeError::domain(format!(
                "grid index ({row}, {col}) outside {}x{}",
                self.grid_rows, self.grid_cols
            )));
        }
        Ok(GridIndex { row, col })
    }

    pub fn label(&self, g: GridIndex) -> usize {
        g.row * self.grid_cols + g.col
    }

    pub fn from_label(&self, label: usize) -> Result<GridIndex> {
        if label >= self.class_count() {
            return Err(GazeError::domain(format!(
                "label {label} outside 0..{}",
                self.class_count()
            )));
        }
        Ok(GridIndex {
            row: label / self.grid_cols,
            col: label % self.grid_cols,
        })
    }
}

/// A cell of the calibration grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

/// Screen location in cm; origin top-left, x right, y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub x_cm: f64,
    pub y_cm: f64,
}

impl GazePoint {
    pub const fn new(x_cm: f64, y_cm: f64) -> Self {
        Self { x_cm, y_cm }
    }

    pub fn clamped(self, geom: &ScreenGeometry) -> Self {
        Self::new(self.x_cm.clamp(0.0, geom.width_cm), self.y_cm.clamp(0.0, geom.height_cm))
    }
}

pub fn grid_to_screen(g: GridIndex, geom: &ScreenGeometry) -> Result<GazePoint> {
    let g = geom.grid_index(g.row, g.col)?;
    Ok(GazePoint::new(
        geom.margin_x() + g.col as f64 * geom.dx_cm,
        geom.margin_y() + g.row as f64 * geom.dy_cm,
    ))
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = GazeError;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(GazeError::domain(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

text_enum!(Posture {
    Standing => "standing",
    Sitting => "sitting",
    Slouching => "slouching",
    Lying => "lying",
});

text_enum!(Race {
    Caucasian => "caucasian",
    Asian => "asian",
    Other => "other",
});

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameRef {
    Path(PathBuf),
    Index(usize),
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameRef::Path(p) => write!(f, "{}", p.display()),
            FrameRef::Index(i) => write!(f, "#{i}"),
        }
    }
}

/// One labeled frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject_id: String,
    pub session_id: String,
    pub posture: Posture,
    pub glasses: bool,
    pub race: Race,
    pub frame_ref: FrameRef,
    pub grid: GridIndex,
    pub timestamp_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Where the pixels and detector candidates of a corpus come from.
#[derive(Clone, Debug)]
pub enum FrameSource {
    /// PNG files on disk plus an optional annotation sidecar keyed by the
    /// frame path as written in the manifest.
    Files {
        root: PathBuf,
        annotations: Arc<HashMap<PathBuf, Vec<BoundingBox>>>,
    },
    /// Frames rendered on demand from the generator.
    Synthetic(Arc<SynthCorpus>),
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub geometry: ScreenGeometry,
    pub records: Vec<SampleRecord>,
    pub provenance: Provenance,
    pub source: FrameSource,
}

impl Corpus {
    pub fn new(
        geometry: ScreenGeometry,
        records: Vec<SampleRecord>,
        provenance: Provenance,
        source: FrameSource,
    ) -> Result<Self> {
        geometry.validate()?;
        if records.is_empty() {
            return Err(GazeError::domain("corpus has no records"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut postures: HashMap<(&str, &str), Posture> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            geometry.grid_index(r.grid.row, r.grid.col)?;
            if !seen.insert((&r.subject_id, &r.session_id, &r.frame_ref)) {
                return Err(GazeError::domain(format!(
                    "record {i}: duplicate frame {} in {}/{}",
                    r.frame_ref, r.subject_id, r.session_id
                )));
            }
            let p = postures.entry((&r.subject_id, &r.session_id)).or_insert(r.posture);
            if *p != r.posture {
                return Err(GazeError::domain(format!(
                    "record {i}: posture changes within session {}/{}",
                    r.subject_id, r.session_id
                )));
            }
        }
        Ok(Self {
            geometry,
            records,
            provenance,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.subject_id) {
                out.push(r.subject_id.clone());
            }
        }
        out
    }

    pub fn frame(&self, index: usize) -> Result<GrayImage> {
        self.load(index).map(|(frame, _)| frame)
    }

    /// Candidate eye boxes for a frame.
    pub fn candidates(&self, index: usize) -> Result<Vec<BoundingBox>> {
        let record = &self.records[index];
        match (&self.source, &record.frame_ref) {
            (FrameSource::Files { annotations, .. }, FrameRef::Path(p)) => Ok(annotations.get(p).cloned().unwrap_or_default()),
            (FrameSource::Synthetic(s), FrameRef::Index(i)) => Ok(s.render(*i).1),
            _ => Err(self.mismatched(index)),
        }
    }

    /// Frame pixels together with its candidate eye boxes.
    pub fn load(&self, index: usize) -> Result<(GrayImage, Vec<BoundingBox>)> {
        let record = &self.records[index];
        match (&self.source, &record.frame_ref) {
            (FrameSource::Files { root, annotations }, FrameRef::Path(p)) => {
                Ok((imaging::load_png(&root.join(p))?, annotations.get(p).cloned().unwrap_or_default()))
            }
            (FrameSource::Synthetic(s), FrameRef::Index(i)) => Ok(s.render(*i)),
            _ => Err(self.mismatched(index)),
        }
    }

    fn mismatched(&self, index: usize) -> GazeError {
        let kind = match self.source {
            FrameSource::Files { .. } => "file-backed",
            FrameSource::Synthetic(_) => "synthetic",
        };
        GazeError::domain(format!("record {index} references {} but the corpus is {kind}", self.records[index].frame_ref))
    }

    /// Content hash of the labeled records (and generator config for
    /// synthetic corpora), hex-encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.geometry).expect("geometry serializes"));
        h.update(serde_json::to_vec(&self.provenance).expect("provenance serializes"));
        if let FrameSource::Synthetic(s) = &self.source {
            h.update(serde_json::to_vec(s.config()).expect("config serializes"));
        }
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("record serializes"));
        }
        hex16(&h.finalize())
    }

    /// Keeps only records for which `keep` holds; the frame source is shared.
    pub fn filter(&self, mut keep: impl FnMut(&SampleRecord) -> bool) -> Result<Corpus> {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Corpus::new(self.geometry, records, self.provenance, self.source.clone())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Window after a dot onset during which the subject is assumed to fixate.
pub fn chunk_window(dot_onset_s: f64) -> (f64, f64) {
    (dot_onset_s + 1.5, dot_onset_s + 2.5)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSelection {
    /// Selected frame indices, ascending.
    pub indices: Vec<usize>,
    /// Set when the chunk held fewer than `k` frames and all were returned.
    pub short: bool,
}

/// Competition ranks (ties share the lowest rank) of `values` under `order`.
fn ranks(values: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut out = vec![0; values.len()];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos > 0 && values[order[pos - 1]] == values[i] {
            out[order[pos - 1]]
        } else {
            pos
        };
    }
    out
}

/// Picks the `k` frames of a fixation chunk that are darkest (open eyes)
/// and sharpest (highest mean |LoG|), by sum of ranks.
pub fn select_frames(chunk: &[GrayImage], k: usize) -> FrameSelection {
    if chunk.len() <= k {
        return FrameSelection {
            indices: (0..chunk.len()).collect(),
            short: chunk.len() < k,
        };
    }
    let kernel = imaging::default_log_kernel();
    let intensity: Vec<f64> = chunk.iter().map(imaging::mean_intensity).collect();
    let sharpness: Vec<f64> = chunk
        .iter()
        .map(|img| {
            let r = imaging::convolve(img, &kernel);
            r.data.iter().map(|v| v.abs()).sum::<f64>() / r.data.len().max(1) as f64
        })
        .collect();
    let ri = ranks(&intensity, false);
    let rs = ranks(&sharpness, true);
    let mut order: Vec<usize> = (0..chunk.len()).collect();
    // equal scores fall back to the darker frame, then to index order
    order.sort_by_key(|&i| (ri[i] + rs[i], ri[i], i));
    let mut indices: Vec<usize> = order.into_iter().take(k).collect();
    indices.sort_unstable();
    FrameSelection { indices, short: false }
}
