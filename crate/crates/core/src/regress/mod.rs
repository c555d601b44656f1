//! Per-axis gaze regressors on top of the shared reduction.

mod forest;
mod io;
mod knn;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, GazePoint};
use crate::error::{GazeError, Result};
use crate::eyes::{eye_geometry_feature, EyeGeometryFeature, EyePair};
use crate::features::{augment, extract, Descriptor};
use crate::pipeline::{prepare, round_f32, PreparedSample, PreparedSet};
use crate::reduction::{fit_reduction, to_matrix, ReductionModel};
use crate::seed;

pub use forest::{fit_rf, ForestParams, Node, RfModel, Tree};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use knn::{fit_knn, KnnModel, DEFAULT_K};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Knn,
    Rf,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 2] = [RegressorKind::Knn, RegressorKind::Rf];

    pub fn as_str(self) -> &'static str {
        match self {
            RegressorKind::Knn => "knn",
            RegressorKind::Rf => "rf",
        }
    }
}

impl fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegressorKind {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| GazeError::domain(format!("unknown regressor '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorParams {
    pub kind: RegressorKind,
    pub k: usize,
    /// The forest seed is replaced per axis from the training seed.
    pub forest: ForestParams,
}

impl RegressorParams {
    pub fn new(kind: RegressorKind) -> Self {
        Self {
            kind,
            k: DEFAULT_K,
            forest: ForestParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regressor {
    Knn(KnnModel),
    Rf(RfModel),
}

impl Regressor {
    pub fn kind(&self) -> RegressorKind {
        match self {
            Regressor::Knn(_) => RegressorKind::Knn,
            Regressor::Rf(_) => RegressorKind::Rf,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Regressor::Knn(m) => m.dim,
            Regressor::Rf(m) => m.dim,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            Regressor::Knn(m) => m.predict(x),
            Regressor::Rf(m) => m.predict(x),
        }
    }
}

/// Where a model's training data came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub corpus: String,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeModel {
    pub descriptor: Descriptor,
    pub augmented: bool,
    pub reduction: ReductionModel,
    pub regressor_x: Regressor,
    pub regressor_y: Regressor,
    pub fingerprint: TrainingFingerprint,
}

/// Fits one axis. Axis seeds are derived from the training seed, so
/// refitting one axis never disturbs the other.
pub fn fit_axis(inputs: &[Vec<f64>], targets: &[f64], params: &RegressorParams, seed_value: u64, axis: &str) -> Result<Regressor> {
    match params.kind {
        RegressorKind::Knn => Ok(Regressor::Knn(fit_knn(inputs, targets, params.k)?)),
        RegressorKind::Rf => {
            let forest = ForestParams {
                seed: seed::derive(seed_value, &format!("forest-{axis}"), 0),
                ..params.forest.clone()
            };
            Ok(Regressor::Rf(fit_rf(inputs, targets, &forest)?))
        }
    }
}

fn regression_input(reduction: &ReductionModel, features: &[f64], geometry: Option<&EyeGeometryFeature>, augmented: bool) -> Result<Vec<f64>> {
    let reduced = reduction.project(features)?;
    match (augmented, geometry) {
        (false, _) => Ok(reduced),
        (true, Some(g)) => Ok(augment(&reduced, g)),
        (true, None) => Err(GazeError::domain("model uses eye geometry but none was supplied")),
    }
}

/// Features and dense labels of the classes with at least 2 samples, and how many such classes there are.
fn lda_classes(samples: &[&PreparedSample], class_count: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>, usize)> {
    let mut counts = vec![0usize; class_count];
    for s in samples {
        *counts.get_mut(s.label).ok_or_else(|| GazeError::domain(format!("label {} outside 0..{class_count}", s.label)))? += 1;
    }
    let mut dense = vec![usize::MAX; class_count];
    let mut kept = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n >= 2 {
            dense[c] = kept;
            kept += 1;
        }
    }
    let (rows, labels) = samples
        .iter()
        .filter(|s| dense[s.label] != usize::MAX)
        .map(|s| (s.features.clone(), dense[s.label]))
        .unzip();
    Ok((rows, labels, kept))
}

/// Fits reduction and both regressors on already prepared samples.
/// Grid points with fewer than 2 samples are left out of the reduction fit but still train the regressors.
pub fn fit_gaze(
    samples: &[&PreparedSample],
    class_count: usize,
    descriptor: Descriptor,
    params: &RegressorParams,
    augmented: bool,
    fingerprint: TrainingFingerprint,
) -> Result<GazeModel> {
    if samples.is_empty() {
        return Err(GazeError::domain("no training samples"));
    }
    let (rows, labels, kept) = lda_classes(samples, class_count)?;
    if kept < class_count {
        log::warn!("{} of {class_count} grid points have fewer than 2 training samples; reduction uses the remaining {kept}", class_count - kept);
    }
    let reduction = fit_reduction(&to_matrix(&rows)?, &labels, kept)?;
    drop(rows);
    let inputs = samples
        .iter()
        .map(|s| regression_input(&reduction, &s.features, Some(&s.geometry), augmented))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = samples.iter().map(|s| s.truth.x_cm).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.truth.y_cm).collect();
    let regressor_x = fit_axis(&inputs, &xs, params, fingerprint.seed, "x")?;
    let regressor_y = fit_axis(&inputs, &ys, params, fingerprint.seed, "y")?;
    Ok(GazeModel {
        descriptor,
        augmented,
        reduction,
        regressor_x,
        regressor_y,
        fingerprint,
    })
}

/// Fits on every usable sample of a prepared set.
pub fn train_on(set: &PreparedSet, params: &RegressorParams, augmented: bool, seed_value: u64) -> Result<GazeModel> {
    let samples: Vec<&PreparedSample> = set.samples.iter().collect();
    let fingerprint = TrainingFingerprint {
        corpus: set.corpus_fingerprint.clone(),
        seed: seed_value,
        samples: samples.len(),
    };
    fit_gaze(&samples, set.geometry.class_count(), set.descriptor, params, augmented, fingerprint)
}

/// Extracts features from the whole corpus and trains on all of it.
pub fn train_gaze(corpus: &Corpus, descriptor: Descriptor, params: &RegressorParams, augmented: bool, seed_value: u64) -> Result<GazeModel> {
    train_on(&prepare(corpus, descriptor)?, params, augmented, seed_value)
}

impl GazeModel {
    /// Prediction from descriptor values (already `f32`-rounded).
    pub fn predict_features(&self, features: &[f64], geometry: Option<&EyeGeometryFeature>) -> Result<GazePoint> {
        let input = regression_input(&self.reduction, features, geometry, self.augmented)?;
        Ok(GazePoint {
            x_cm: self.regressor_x.predict(&input)?,
            y_cm: self.regressor_y.predict(&input)?,
        })
    }

    pub fn predict_sample(&self, sample: &PreparedSample) -> Result<GazePoint> {
        self.predict_features(&sample.features, Some(&sample.geometry))
    }
}

/// Gaze estimate for one canonical eye pair. The geometry is taken from the
/// pair's boxes unless given explicitly.
pub fn predict_gaze(model: &GazeModel, pair: &EyePair, geometry: Option<&EyeGeometryFeature>) -> Result<GazePoint> {
    let features = round_f32(&extract(pair, model.descriptor).values);
    let own = eye_geometry_feature(&pair.left_box, &pair.right_box);
    model.predict_features(&features, Some(geometry.unwrap_or(&own)))
}
